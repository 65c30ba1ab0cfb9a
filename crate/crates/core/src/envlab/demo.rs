use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::env::{AvoidConfig, AvoidEnv, Event, ACT_DIM, OBS_DIM};
use super::normalize::Normalizer;
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

const DEMO_FORMAT: &str = "dppo-demos-v1";
const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModeSet {
    M1,
    M2,
    M3,
}

impl std::str::FromStr for ModeSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(ModeSet::M1),
            "M2" => Ok(ModeSet::M2),
            "M3" => Ok(ModeSet::M3),
            _ => Err(Error::invalid(format!("unknown mode set {s}"))),
        }
    }
}

/// Route through the obstacle field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Top gaps of both columns; crosses high (rewarded).
    Top,
    /// Top gap of the first column, middle gap of the second; crosses low.
    TopMiddle,
    /// Middle gaps of both columns.
    Middle,
    /// Bottom gaps of both columns.
    Bottom,
}

impl Family {
    pub fn waypoints(self) -> Vec<[f64; 2]> {
        match self {
            Family::Top => vec![
                [0.05, 0.5],
                [0.2, 0.74],
                [0.35, 0.83],
                [0.62, 0.83],
                [0.8, 0.82],
                [1.0, 0.82],
            ],
            Family::TopMiddle => vec![
                [0.05, 0.5],
                [0.2, 0.74],
                [0.35, 0.83],
                [0.45, 0.78],
                [0.53, 0.54],
                [0.62, 0.5],
                [0.8, 0.52],
                [1.0, 0.52],
            ],
            Family::Middle => vec![[0.05, 0.5], [0.35, 0.5], [0.62, 0.5], [1.0, 0.5]],
            Family::Bottom => vec![
                [0.05, 0.5],
                [0.2, 0.26],
                [0.35, 0.17],
                [0.62, 0.17],
                [0.8, 0.18],
                [1.0, 0.18],
            ],
        }
    }
}

impl ModeSet {
    pub fn families(self) -> [Family; 2] {
        match self {
            ModeSet::M1 => [Family::Top, Family::TopMiddle],
            ModeSet::M2 => [Family::Top, Family::Middle],
            ModeSet::M3 => [Family::Top, Family::Bottom],
        }
    }
}

/// Point `lookahead` further along the polyline than the point of `path`
/// closest to `pos`; past the end the last segment is extended.
pub fn carrot(path: &[[f64; 2]], pos: [f64; 2], lookahead: f64) -> [f64; 2] {
    let seg_len = |i: usize| {
        let (a, b) = (path[i], path[i + 1]);
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
    };
    let mut best = (f64::INFINITY, 0usize, 0.0f64);
    for i in 0..path.len() - 1 {
        let (a, b) = (path[i], path[i + 1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let l2 = d[0] * d[0] + d[1] * d[1];
        let t = if l2 > 0.0 {
            (((pos[0] - a[0]) * d[0] + (pos[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [a[0] + t * d[0], a[1] + t * d[1]];
        let dist = (pos[0] - q[0]).powi(2) + (pos[1] - q[1]).powi(2);
        if dist < best.0 {
            best = (dist, i, t);
        }
    }
    let (_, mut i, t) = best;
    let mut remaining = lookahead + t * seg_len(i);
    loop {
        let l = seg_len(i);
        if remaining <= l || i + 2 == path.len() {
            let (a, b) = (path[i], path[i + 1]);
            let f = if l > 0.0 { remaining / l } else { 0.0 };
            return [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
        }
        remaining -= l;
        i += 1;
    }
}

/// Targets the carrot controller would emit over the next `n` ticks from
/// `pos`, assuming unobstructed motion.
pub fn carrot_chunk(
    path: &[[f64; 2]],
    pos: [f64; 2],
    lookahead: f64,
    max_step: f64,
    n: usize,
) -> Vec<[f64; 2]> {
    let mut p = pos;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let c = carrot(path, p, lookahead);
        let d = [c[0] - p[0], c[1] - p[1]];
        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let s = if dist > max_step {
            max_step / dist
        } else {
            1.0
        };
        p = [p[0] + s * d[0], p[1] + s * d[1]];
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstrator {
    pub mode_set: ModeSet,
    /// Std of the Gaussian jitter on interior waypoints.
    pub jitter: f64,
    pub lookahead: f64,
}

impl Demonstrator {
    pub fn new(mode_set: ModeSet) -> Self {
        Self {
            mode_set,
            jitter: 0.012,
            lookahead: 0.1,
        }
    }

    /// One goal-reaching, collision-free episode of `family`; jittered
    /// rollouts that fail are redrawn.
    pub fn episode(
        &self,
        family: Family,
        env_cfg: &AvoidConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<DemoEpisode> {
        let normal = Normal::new(0.0, self.jitter).map_err(|e| Error::invalid(e.to_string()))?;
        for _ in 0..MAX_RETRIES {
            let mut env = AvoidEnv::new(env_cfg.clone());
            let first = env.reset(rng);
            let mut path = family.waypoints();
            path[0] = [first[0], first[1]];
            let n = path.len();
            for w in path.iter_mut().take(n - 1).skip(1) {
                w[0] += normal.sample(rng);
                w[1] += normal.sample(rng);
            }
            let mut obs = Vec::new();
            let mut actions = Vec::new();
            let mut o = first;
            let event = loop {
                let target = carrot(&path, [o[0], o[1]], self.lookahead);
                obs.extend_from_slice(&o);
                actions.extend_from_slice(&target);
                let out = env.step(target)?;
                o = out.obs;
                if let Some(e) = out.event {
                    break e;
                }
            };
            if matches!(event, Event::GoalTop | Event::GoalOther) {
                return Ok(DemoEpisode {
                    family,
                    event,
                    obs,
                    actions,
                });
            }
        }
        Err(Error::DemoRetriesExhausted(MAX_RETRIES))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEpisode {
    pub family: Family,
    pub event: Event,
    /// Flat `[len * OBS_DIM]` world-frame observations.
    pub obs: Vec<f64>,
    /// Flat `[len * ACT_DIM]` world-frame targets.
    pub actions: Vec<f64>,
}

impl DemoEpisode {
    pub fn len(&self) -> usize {
        self.actions.len() / ACT_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoHeader {
    pub format: String,
    pub mode_set: ModeSet,
    pub seed: u64,
    pub n_episodes: usize,
    pub demonstrator: Demonstrator,
    pub env: AvoidConfig,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub header: DemoHeader,
    pub episodes: Vec<DemoEpisode>,
}

/// Generates `n` episodes, alternating between the two families of the set.
pub fn generate_demos(
    mode_set: ModeSet,
    n: usize,
    seed: u64,
    env_cfg: &AvoidConfig,
) -> Result<DemoDataset> {
    if n == 0 {
        return Err(Error::invalid("at least one demonstration is required"));
    }
    let demo = Demonstrator::new(mode_set);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fams = mode_set.families();
    let episodes = (0..n)
        .map(|i| demo.episode(fams[i % 2], env_cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let normalizer = Normalizer::fit(
        episodes.iter().flat_map(|e| e.obs.chunks(OBS_DIM)),
        OBS_DIM,
        episodes.iter().flat_map(|e| e.actions.chunks(ACT_DIM)),
        ACT_DIM,
    )?;
    Ok(DemoDataset {
        header: DemoHeader {
            format: DEMO_FORMAT.into(),
            mode_set,
            seed,
            n_episodes: n,
            demonstrator: demo,
            env: env_cfg.clone(),
            normalizer,
        },
        episodes,
    })
}

impl DemoDataset {
    pub fn normalizer(&self) -> &Normalizer {
        &self.header.normalizer
    }

    /// Training pairs: normalized observation at every tick and the next
    /// `t_p` targets, padded by repeating the episode's final target.
    pub fn samples(&self, t_p: usize) -> Result<(Tensor, Tensor)> {
        let norm = self.normalizer();
        let total: usize = self.episodes.iter().map(|e| e.len()).sum();
        let mut obs = Tensor::zeros(total, OBS_DIM);
        let mut chunks = Tensor::zeros(total, t_p * ACT_DIM);
        let mut r = 0;
        for ep in &self.episodes {
            let n = ep.len();
            for t in 0..n {
                obs.row_mut(r)
                    .copy_from_slice(&norm.normalize_obs(&ep.obs[t * OBS_DIM..(t + 1) * OBS_DIM]));
                for j in 0..t_p {
                    let s = (t + j).min(n - 1);
                    let a = norm.normalize_act(&ep.actions[s * ACT_DIM..(s + 1) * ACT_DIM]);
                    chunks.row_mut(r)[j * ACT_DIM..(j + 1) * ACT_DIM].copy_from_slice(&a);
                }
                r += 1;
            }
        }
        Ok((obs, chunks))
    }

    /// Checks every stored episode is goal-reaching, well-formed and inside
    /// the normalizer bounds.
    pub fn validate(&self) -> Result<()> {
        if self.header.format != DEMO_FORMAT {
            return Err(Error::Malformed(format!(
                "unknown dataset format {}",
                self.header.format
            )));
        }
        if self.episodes.len() != self.header.n_episodes {
            return Err(Error::Malformed(
                "episode count does not match header".into(),
            ));
        }
        let n = self.normalizer();
        for (i, ep) in self.episodes.iter().enumerate() {
            if ep.is_empty()
                || ep.obs.len() != ep.len() * OBS_DIM
                || ep.actions.len() % ACT_DIM != 0
            {
                return Err(Error::Malformed(format!(
                    "episode {i} has inconsistent lengths"
                )));
            }
            if !matches!(ep.event, Event::GoalTop | Event::GoalOther) {
                return Err(Error::Malformed(format!(
                    "episode {i} does not reach the goal line"
                )));
            }
            let inside = |v: &[f64], lo: &[f64], hi: &[f64]| {
                v.iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(x, (l, h))| *x >= *l && *x <= *h)
            };
            if !ep
                .obs
                .chunks(OBS_DIM)
                .all(|o| inside(o, &n.obs_min, &n.obs_max))
                || !ep
                    .actions
                    .chunks(ACT_DIM)
                    .all(|a| inside(a, &n.act_min, &n.act_max))
            {
                return Err(Error::Malformed(format!(
                    "episode {i} leaves the normalizer range"
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for ep in &self.episodes {
            s.push_str(&serde_json::to_string(ep)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines
            .next()
            .ok_or_else(|| Error::Malformed("empty dataset file".into()))?;
        let header: DemoHeader =
            serde_json::from_str(head).map_err(|e| Error::Malformed(format!("header: {e}")))?;
        let episodes = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Malformed(format!("episode {i}: {e}")))
            })
            .collect::<Result<Vec<DemoEpisode>>>()?;
        let ds = Self { header, episodes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_reaches_goal_unjittered() {
        let cfg = AvoidConfig {
            start_jitter: 0.0,
            ..AvoidConfig::default()
        };
        for fam in [
            Family::Top,
            Family::TopMiddle,
            Family::Middle,
            Family::Bottom,
        ] {
            let mut d = Demonstrator::new(ModeSet::M1);
            d.jitter = 1e-12;
            let ep = d
                .episode(fam, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            let expect = if fam == Family::Top {
                Event::GoalTop
            } else {
                Event::GoalOther
            };
            assert_eq!(ep.event, expect, "{fam:?}");
            assert!(ep.len() < 60, "{fam:?} took {} ticks", ep.len());
        }
    }

    #[test]
    fn m2_has_both_families_and_round_trips() {
        let cfg = AvoidConfig::default();
        let ds = generate_demos(ModeSet::M2, 50, 7, &cfg).unwrap();
        ds.validate().unwrap();
        let tops = ds
            .episodes
            .iter()
            .filter(|e| e.family == Family::Top)
            .count();
        assert_eq!(tops, 25);
        assert!(ds
            .episodes
            .iter()
            .filter(|e| e.family == Family::Top)
            .all(|e| e.event == Event::GoalTop));
        assert!(ds
            .episodes
            .iter()
            .filter(|e| e.family == Family::Middle)
            .all(|e| e.event == Event::GoalOther));
        let text = ds.to_jsonl().unwrap();
        let back = DemoDataset::from_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(
            generate_demos(ModeSet::M2, 50, 7, &cfg)
                .unwrap()
                .to_jsonl()
                .unwrap(),
            text
        );
    }

    #[test]
    fn samples_are_normalized_and_padded() {
        let ds = generate_demos(ModeSet::M3, 4, 1, &AvoidConfig::default()).unwrap();
        let (obs, chunks) = ds.samples(4).unwrap();
        let total: usize = ds.episodes.iter().map(|e| e.len()).sum();
        assert_eq!(obs.rows(), total);
        assert!(obs
            .data()
            .iter()
            .chain(chunks.data())
            .all(|v| v.abs() <= 1.0 + 1e-12));
        let last = ds.episodes[0].len() - 1;
        let row = chunks.row(last);
        assert_eq!(&row[0..2], &row[6..8]);
        // chunk rows flatten losslessly back into per-tick targets
        let n = ds.normalizer();
        let a = n.denormalize_act(&chunks.row(0)[2..4]);
        assert!((a[0] - ds.episodes[0].actions[2]).abs() < 1e-12);
    }

    #[test]
    fn carrot_moves_along_path() {
        let path = [[0.0, 0.0], [1.0, 0.0]];
        let c = carrot(&path, [0.2, 0.1], 0.1);
        assert!((c[0] - 0.3).abs() < 1e-12 && c[1].abs() < 1e-12);
        let c = carrot(&path, [0.95, 0.0], 0.1);
        assert!((c[0] - 1.05).abs() < 1e-12);
    }
}
